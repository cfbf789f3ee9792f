//! Token router: scores, selection weights `m` and the selection matrix `P`.

use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::error::{CodaError, Result};
use crate::soft_topk::{self, EpsSchedule, ScoreVector};
use crate::tensor::{matmul, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RouterVariant {
    /// Entropy-regularized soft top-k over the scores.
    #[default]
    SoftTopk,
    /// Independent sigmoid per token, then top-k by the sigmoid value.
    SigmoidGate,
    /// The first k tokens with weight 1; no learned signal.
    Truncation,
}

impl RouterVariant {
    pub fn name(self) -> &'static str {
        match self {
            RouterVariant::SoftTopk => "soft_topk",
            RouterVariant::SigmoidGate => "sigmoid_gate",
            RouterVariant::Truncation => "truncation",
        }
    }

    /// Whether the router scores (and thus `w`) take part in the computation.
    pub fn uses_scores(self) -> bool {
        !matches!(self, RouterVariant::Truncation)
    }
}

impl std::str::FromStr for RouterVariant {
    type Err = CodaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft_topk" => Ok(RouterVariant::SoftTopk),
            "sigmoid_gate" | "sigmoid" => Ok(RouterVariant::SigmoidGate),
            "truncation" => Ok(RouterVariant::Truncation),
            other => Err(CodaError::Input(format!("unknown router variant {other:?}"))),
        }
    }
}

/// Score projection `w` stored as a d×1 column.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams {
    pub w: Matrix,
}

impl RouterParams {
    pub fn new(w: Vec<f64>) -> Self {
        Self {
            w: Matrix::column_vector(&w),
        }
    }

    pub fn init(d: usize, rng: &mut Rng) -> Self {
        Self {
            w: rng.gaussian_matrix(d, 1, 1.0 / (d as f64).sqrt()),
        }
    }

    pub fn dim(&self) -> usize {
        self.w.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    /// Selection weights: `λ` on selected tokens, zero elsewhere.
    pub m: Vec<f64>,
    pub lambda: Vec<f64>,
    /// Selected token indices, ascending. Row i of `P` picks token
    /// `selected_indices[i]`.
    pub selected_indices: Vec<usize>,
}

impl SelectionResult {
    /// Every token selected with weight 1.
    pub fn all(n: usize) -> Self {
        Self {
            m: vec![1.0; n],
            lambda: vec![1.0; n],
            selected_indices: (0..n).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.m.len()
    }

    pub fn k(&self) -> usize {
        self.selected_indices.len()
    }

    pub fn is_selected(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n()];
        for &i in &self.selected_indices {
            mask[i] = true;
        }
        mask
    }

    /// The k×n one-hot matrix `P`.
    pub fn selection_matrix(&self) -> Matrix {
        let mut p = Matrix::zeros(self.k(), self.n());
        for (row, &col) in self.selected_indices.iter().enumerate() {
            p.set(row, col, 1.0);
        }
        p
    }
}

fn check_capacity(k: usize, n: usize) -> Result<()> {
    if k < 1 || k > n {
        Err(CodaError::Capacity { k, n })
    } else {
        Ok(())
    }
}

/// `s = x_norm · w`, one score per token.
pub fn scores(x_norm: &Matrix, params: &RouterParams) -> Result<Vec<f64>> {
    Ok(matmul(x_norm, &params.w)?.into_data())
}

/// The normalized scores `λ = f(s)` for a variant. Truncation ignores `s`.
pub fn normalize(s: &[f64], k: usize, variant: RouterVariant, sched: &EpsSchedule) -> Result<Vec<f64>> {
    check_capacity(k, s.len())?;
    Ok(match variant {
        RouterVariant::SoftTopk => soft_topk::soft_topk(&ScoreVector::new(s.to_vec())?, k, sched)?.lambda,
        RouterVariant::SigmoidGate => s.iter().map(|&v| sigmoid(v)).collect(),
        RouterVariant::Truncation => truncation_lambda(s.len(), k),
    })
}

pub(crate) fn truncation_lambda(n: usize, k: usize) -> Vec<f64> {
    (0..n).map(|i| if i < k { 1.0 } else { 0.0 }).collect()
}

/// Clips `λ` to its top-k entries: `m = λ ⊙ Top(λ, k)`.
pub fn select(lambda: Vec<f64>, k: usize, variant: RouterVariant) -> Result<SelectionResult> {
    let n = lambda.len();
    check_capacity(k, n)?;
    let selected_indices = match variant {
        RouterVariant::Truncation => (0..k).collect(),
        _ => soft_topk::top_k_indices(&lambda, k)?,
    };
    let mut m = vec![0.0; n];
    for &i in &selected_indices {
        m[i] = lambda[i];
    }
    Ok(SelectionResult {
        m,
        lambda,
        selected_indices,
    })
}

pub fn route(
    x_norm: &Matrix,
    params: &RouterParams,
    k: usize,
    variant: RouterVariant,
    sched: &EpsSchedule,
) -> Result<SelectionResult> {
    let n = x_norm.rows();
    check_capacity(k, n)?;
    if !x_norm.is_finite() {
        return Err(CodaError::Input("router input has non-finite entries".into()));
    }
    let lambda = match variant {
        RouterVariant::Truncation => truncation_lambda(n, k),
        _ => normalize(&scores(x_norm, params)?, k, variant, sched)?,
    };
    select(lambda, k, variant)
}

/// `P · x_norm` as a row gather.
pub fn gather(x_norm: &Matrix, sel: &SelectionResult) -> Result<Matrix> {
    if x_norm.rows() != sel.n() {
        return Err(CodaError::dim("gather", x_norm.shape(), (sel.k(), sel.n())));
    }
    x_norm.gather_rows(&sel.selected_indices)
}

/// `Pᵀ · z_routed` as a row scatter into `n` zero rows.
pub fn scatter(z_routed: &Matrix, sel: &SelectionResult, n: usize) -> Result<Matrix> {
    if z_routed.rows() != sel.k() || n != sel.n() {
        return Err(CodaError::dim("scatter", z_routed.shape(), (sel.k(), n)));
    }
    z_routed.scatter_rows(&sel.selected_indices, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_capacity_selects_everything() {
        let mut rng = Rng::new(1);
        let x = rng.gaussian_matrix(3, 4, 1.0);
        let params = RouterParams::init(4, &mut rng);
        for v in [RouterVariant::SoftTopk, RouterVariant::SigmoidGate, RouterVariant::Truncation] {
            let sel = route(&x, &params, 3, v, &EpsSchedule::TEXT).unwrap();
            assert_eq!(sel.selection_matrix(), Matrix::identity(3));
            assert_eq!(sel.m, sel.lambda);
        }
    }

    #[test]
    fn truncation_selects_prefix() {
        let mut rng = Rng::new(2);
        let x = rng.gaussian_matrix(5, 4, 1.0);
        let params = RouterParams::init(4, &mut rng);
        let sel = route(&x, &params, 2, RouterVariant::Truncation, &EpsSchedule::TEXT).unwrap();
        assert_eq!(sel.selected_indices, vec![0, 1]);
        assert_eq!(sel.m, vec![1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn capacity_errors() {
        let x = Matrix::zeros(3, 2);
        let params = RouterParams::new(vec![1.0, 0.0]);
        for k in [0, 4] {
            assert!(matches!(
                route(&x, &params, k, RouterVariant::SoftTopk, &EpsSchedule::TEXT),
                Err(CodaError::Capacity { .. })
            ));
        }
    }

    #[test]
    fn selection_invariants() {
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let n = 2 + rng.below(12);
            let k = 1 + rng.below(n);
            let x = rng.gaussian_matrix(n, 6, 1.0);
            let params = RouterParams::init(6, &mut rng);
            for v in [RouterVariant::SoftTopk, RouterVariant::SigmoidGate] {
                let sel = route(&x, &params, k, v, &EpsSchedule::SPEECH).unwrap();
                let p = sel.selection_matrix();
                for r in 0..k {
                    assert_eq!(p.row(r).iter().filter(|&&e| e == 1.0).count(), 1);
                    assert_eq!(p.get(r, sel.selected_indices[r]), 1.0);
                }
                for c in 0..n {
                    assert!((0..k).map(|r| p.get(r, c)).sum::<f64>() <= 1.0);
                }
                assert!(sel.selected_indices.windows(2).all(|w| w[0] < w[1]));
                let chosen = sel.is_selected();
                for j in 0..n {
                    if chosen[j] {
                        assert_eq!(sel.m[j], sel.lambda[j]);
                    } else {
                        assert_eq!(sel.m[j], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn gather_and_scatter_definitions() {
        let x = Matrix::from_rows(&[vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, 5.0], vec![6.0, 7.0]]);
        let sel = select(vec![0.1, 0.9, 0.2, 0.8], 2, RouterVariant::SoftTopk).unwrap();
        assert_eq!(sel.selected_indices, vec![1, 3]);
        let g = gather(&x, &sel).unwrap();
        assert_eq!(g, Matrix::from_rows(&[vec![2.0, 3.0], vec![6.0, 7.0]]));
        let s = scatter(&g, &sel, 4).unwrap();
        assert_eq!(s.row(0), &[0.0, 0.0]);
        assert_eq!(s.row(2), &[0.0, 0.0]);
        assert_eq!(s.row(1), x.row(1));
        assert_eq!(s.row(3), x.row(3));
        assert_eq!(gather(&x, &SelectionResult::all(4)).unwrap(), x);
        assert!(scatter(&g, &sel, 5).is_err());
    }

    #[test]
    fn gather_equals_matmul_exactly() {
        let mut rng = Rng::new(4);
        for _ in 0..20 {
            let n = 3 + rng.below(8);
            let k = 1 + rng.below(n);
            let x = rng.gaussian_matrix(n, 5, 1.0);
            let sel = select(rng.uniform_vec(n, 0.0, 1.0), k, RouterVariant::SigmoidGate).unwrap();
            let via_matmul = matmul(&sel.selection_matrix(), &x).unwrap();
            assert_eq!(gather(&x, &sel).unwrap(), via_matmul);
            let z = rng.gaussian_matrix(k, 5, 1.0);
            let via_t = matmul(&sel.selection_matrix().transpose(), &z).unwrap();
            assert_eq!(scatter(&z, &sel, n).unwrap(), via_t);
        }
    }
}

//! Representation batches, column z-scoring, the original-vs-augmented
//! cross-correlation matrix and the factorization loss built on it.

use ndarray::{Array1, Array2, Axis};

use crate::error::{CirlError, Result};
use crate::real::Real;

/// Columns whose (population) standard deviation is at or below this are
/// treated as constant and z-score to all zeros.
pub const DEGENERATE_STD: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tag {
    Original,
    Augmented,
}

/// `B x N` feature matrix for one view of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationBatch<F> {
    values: Array2<F>,
    tag: Tag,
}

impl<F: Real> RepresentationBatch<F> {
    pub fn new(values: Array2<F>, tag: Tag) -> Result<Self> {
        if values.nrows() < 2 {
            return Err(CirlError::invalid(format!(
                "representation batch needs at least 2 rows, got {}",
                values.nrows()
            )));
        }
        if let Some((idx, _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(CirlError::Numeric(format!("non-finite representation at {idx:?}")));
        }
        Ok(Self { values, tag })
    }

    pub fn values(&self) -> &Array2<F> {
        &self.values
    }

    pub fn into_values(self) -> Array2<F> {
        self.values
    }

    pub fn tag(&self) -> Tag {
        self.tag
    }

    pub fn batch_size(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// Square correlation matrix between original (rows) and augmented
/// (columns) feature dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix<F> {
    values: Array2<F>,
}

impl<F: Real> CorrelationMatrix<F> {
    pub fn new(values: Array2<F>) -> Result<Self> {
        if values.nrows() != values.ncols() {
            return Err(CirlError::invalid(format!(
                "correlation matrix must be square, got {:?}",
                values.dim()
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array2<F> {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }
}

/// Centered, unit-norm columns plus each column's norm before scaling.
/// Degenerate columns come back as zeros with norm 0.
struct UnitColumns<F> {
    units: Array2<F>,
    norms: Array1<F>,
}

fn unit_columns<F: Real>(r: &Array2<F>) -> UnitColumns<F> {
    let b = F::from_usize(r.nrows()).expect("rows");
    let eps = F::lit(DEGENERATE_STD);
    let mean = r.sum_axis(Axis(0)) / b;
    let mut units = r - &mean;
    let mut norms = Array1::<F>::zeros(r.ncols());
    for (j, mut col) in units.axis_iter_mut(Axis(1)).enumerate() {
        let ss: F = col.iter().map(|&v| v * v).sum();
        let norm = ss.sqrt();
        if norm / b.sqrt() > eps {
            col.mapv_inplace(|v| v / norm);
            norms[j] = norm;
        } else {
            col.fill(F::zero());
        }
    }
    UnitColumns { units, norms }
}

/// Column z-scores with population standard deviation. Near-constant
/// columns map to zeros.
pub fn zscore_columns<F: Real>(r: &RepresentationBatch<F>) -> Result<RepresentationBatch<F>> {
    let b = r.batch_size();
    if b < 2 {
        return Err(CirlError::invalid("z-scoring needs at least 2 rows"));
    }
    let scale = F::from_usize(b).expect("rows").sqrt();
    let z = unit_columns(&r.values).units.mapv(|v| v * scale);
    Ok(RepresentationBatch { values: z, tag: r.tag })
}

fn check_pair<F: Real>(ro: &RepresentationBatch<F>, ra: &RepresentationBatch<F>) -> Result<()> {
    if ro.values.dim() != ra.values.dim() {
        return Err(CirlError::invalid(format!(
            "original {:?} and augmented {:?} representations differ in shape",
            ro.values.dim(),
            ra.values.dim()
        )));
    }
    Ok(())
}

/// `C_ij` = cosine similarity of z-scored column `i` of `ro` and z-scored
/// column `j` of `ra`; entries touching a degenerate column are 0.
pub fn correlation_matrix<F: Real>(ro: &RepresentationBatch<F>, ra: &RepresentationBatch<F>) -> Result<CorrelationMatrix<F>> {
    check_pair(ro, ra)?;
    let uo = unit_columns(&ro.values);
    let ua = unit_columns(&ra.values);
    Ok(CorrelationMatrix {
        values: uo.units.t().dot(&ua.units),
    })
}

/// `½‖C − I‖²_F`
pub fn factorization_loss<F: Real>(c: &CorrelationMatrix<F>) -> F {
    let half = F::lit(0.5);
    c.values
        .indexed_iter()
        .map(|((i, j), &v)| {
            let d = if i == j { v - F::one() } else { v };
            d * d
        })
        .sum::<F>()
        * half
}

/// `‖C‖²_F − ‖diag(C)‖²`: squared off-diagonal mass.
pub fn independence_degree<F: Real>(c: &CorrelationMatrix<F>) -> F {
    c.values
        .indexed_iter()
        .filter(|((i, j), _)| i != j)
        .map(|(_, &v)| v * v)
        .sum()
}

/// Factorization loss evaluated on raw representations, with its gradients.
#[derive(Clone, Debug)]
pub struct FactorizationGrad<F> {
    pub loss: F,
    pub correlation: CorrelationMatrix<F>,
    pub grad_original: Array2<F>,
    pub grad_augmented: Array2<F>,
}

/// Backpropagates a gradient on unit columns through centering and
/// normalization.
fn unit_backward<F: Real>(cols: &UnitColumns<F>, grad_units: &Array2<F>) -> Array2<F> {
    let b = F::from_usize(cols.units.nrows()).expect("rows");
    let mut out = Array2::<F>::zeros(cols.units.raw_dim());
    for j in 0..cols.units.ncols() {
        let norm = cols.norms[j];
        if norm == F::zero() {
            continue;
        }
        let u = cols.units.column(j);
        let g = grad_units.column(j);
        let proj: F = u.iter().zip(g.iter()).map(|(&a, &b)| a * b).sum();
        let gy: Vec<F> = u.iter().zip(g.iter()).map(|(&ui, &gi)| (gi - ui * proj) / norm).collect();
        let mean = gy.iter().copied().sum::<F>() / b;
        for (dst, v) in out.column_mut(j).iter_mut().zip(gy) {
            *dst = v - mean;
        }
    }
    out
}

/// Loss, correlation matrix and `∂L/∂R^o`, `∂L/∂R^a`.
pub fn factorization_loss_with_grad<F: Real>(
    ro: &RepresentationBatch<F>,
    ra: &RepresentationBatch<F>,
) -> Result<FactorizationGrad<F>> {
    check_pair(ro, ra)?;
    let uo = unit_columns(&ro.values);
    let ua = unit_columns(&ra.values);
    let c = CorrelationMatrix {
        values: uo.units.t().dot(&ua.units),
    };
    let loss = factorization_loss(&c);
    let mut g = c.values.clone();
    for i in 0..g.nrows() {
        g[[i, i]] -= F::one();
    }
    // C = Uo^T Ua  =>  dUo = Ua G^T, dUa = Uo G
    let grad_uo = ua.units.dot(&g.t());
    let grad_ua = uo.units.dot(&g);
    Ok(FactorizationGrad {
        loss,
        correlation: c,
        grad_original: unit_backward(&uo, &grad_uo),
        grad_augmented: unit_backward(&ua, &grad_ua),
    })
}
